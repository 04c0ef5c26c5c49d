//! Three-stage training, cross-validation splitting, threshold fitting and
//! checkpointing.
//!
//! Stage 1 trains the backbone on single (view, vessel score) pairs through
//! a provisional affine output. Stage 2 freezes the backbone and trains the
//! fusion head on multi-view studies (embeddings are cached when no
//! augmentation is active, so head epochs are cheap). Stage 3 fine-tunes
//! everything at the lower learning rate, checkpoints each epoch, and keeps
//! the best-validation weights. The loss is MSE in ln(1 + score) space for
//! score regression and binary cross-entropy with logits for the dominance
//! task; there are no other loss paths.
//!
//! Everything is deterministic under a fixed seed: shuffles, splits,
//! initialization and augmentation all derive from `TrainConfig::seed`
//! through a hash, and training is single-threaded.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::metrics::{
    classification_report, cross_val_aggregate, regression_report, subgroup_eval, Aggregate,
    ClassificationReport, EvalInputs, RegressionReport,
};
use crate::model::checkpoint::{
    read_checkpoint, save_predictor, vessel_model_from_section, vessel_model_section, Section,
};
use crate::model::heads::MeanHead;
use crate::model::nn::{sigmoid, ParamLayout};
use crate::model::{
    score_transform, BackboneConfig, FusionHeadConfig, StudyPredictor, VesselModel,
};
use crate::sampler::{view_to_clip, AugmentPolicy};
use crate::study::{views_by_vessel, Dominance, Manifest, Study, Vessel, View};
use crate::synth::study_seed;
use crate::Result;

/// What the branch is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Regress ln(1 + vessel score) with MSE.
    Syntax,
    /// Classify left dominance from RCA views with BCE on the logit.
    Dominance,
}

/// One-cycle schedule shape: cosine warmup to the peak over the warmup
/// fraction, then cosine annealing down to peak / (div * final_div).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneCycleConfig {
    pub warmup_frac: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        OneCycleConfig {
            warmup_frac: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

/// A materialized one-cycle schedule over a known number of steps.
#[derive(Debug, Clone)]
pub struct OneCycle {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub cfg: OneCycleConfig,
}

impl OneCycle {
    pub fn new(peak_lr: f64, total_steps: usize, cfg: OneCycleConfig) -> Self {
        OneCycle {
            peak_lr,
            total_steps: total_steps.max(1),
            cfg,
        }
    }

    /// Learning rate at a 0-based optimizer step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let initial = self.peak_lr / self.cfg.div_factor;
        let min_lr = initial / self.cfg.final_div_factor;
        let warmup_steps = (self.cfg.warmup_frac * self.total_steps as f64).round() as usize;
        let cos_ramp = |from: f64, to: f64, p: f64| {
            from + (to - from) * (1.0 - (std::f64::consts::PI * p).cos()) / 2.0
        };
        if step < warmup_steps {
            let p = (step as f64 + 1.0) / warmup_steps as f64;
            cos_ramp(initial, self.peak_lr, p)
        } else {
            let rest = (self.total_steps - warmup_steps).max(1);
            let p = ((step - warmup_steps) as f64 + 1.0) / rest as f64;
            cos_ramp(self.peak_lr, min_lr, p.min(1.0))
        }
    }
}

/// Training hyperparameters. Stage batch sizes and learning rates default
/// to the reference recipe: batch 16 for backbone training, 8 for head
/// training, 1e-4 for stages 1-2 and 1e-5 for fine-tuning, all on a
/// one-cycle schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub batch_size_backbone: usize,
    pub batch_size_head: usize,
    pub lr_backbone: f64,
    pub lr_finetune: f64,
    pub one_cycle: OneCycleConfig,
    pub augment: AugmentPolicy,
    /// Share of the training studies held out for validation (threshold
    /// fitting and best-checkpoint selection).
    pub val_fraction: f64,
    pub k_folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 30,
            stage2_epochs: 20,
            stage3_epochs: 10,
            batch_size_backbone: 16,
            batch_size_head: 8,
            lr_backbone: 1e-4,
            lr_finetune: 1e-5,
            one_cycle: OneCycleConfig::default(),
            augment: AugmentPolicy::None,
            val_fraction: 0.15,
            k_folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 || self.stage3_epochs == 0 {
            return Err(Error::Config("stage epochs must be positive".into()));
        }
        if self.batch_size_backbone == 0 || self.batch_size_head == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.lr_finetune > self.lr_backbone {
            return Err(Error::Config(
                "fine-tune learning rate must not exceed the backbone rate".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.k_folds < 2 {
            return Err(Error::Config("k_folds must be >= 2".into()));
        }
        Ok(())
    }
}

/// Seed mixer for deriving independent sub-streams.
fn sub_seed(base: u64, salt: u64, index: u64) -> u64 {
    study_seed(study_seed(base, salt), index)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with the usual defaults; one instance per parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// One training study for a single vessel branch: its views of that vessel
/// and the target in model-output space.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub study_id: String,
    pub views: Vec<View>,
    pub target: f64,
}

/// Per-vessel training set.
#[derive(Debug, Clone)]
pub struct VesselDataset {
    pub vessel: Vessel,
    pub items: Vec<TrainItem>,
}

impl VesselDataset {
    /// Build the branch dataset from labeled studies. Studies lacking the
    /// needed label or any view of the vessel are skipped with a warning.
    pub fn build(studies: &[Study], vessel: Vessel, task: Task) -> Result<Self> {
        let mut items = Vec::new();
        for study in studies {
            let views: Vec<View> = views_by_vessel(study, vessel)
                .into_iter()
                .cloned()
                .collect();
            let target = match task {
                Task::Syntax => match study.labels.vessel_score(vessel) {
                    Some(score) => score_transform(score)?,
                    None => continue,
                },
                Task::Dominance => match study.labels.dominance {
                    Some(Dominance::Left) => 1.0,
                    Some(Dominance::Right) => 0.0,
                    None => continue,
                },
            };
            if views.is_empty() {
                log::warn!(
                    "study {}: no {vessel} views, excluded from {vessel} training",
                    study.study_id
                );
                continue;
            }
            items.push(TrainItem {
                study_id: study.study_id.clone(),
                views,
                target,
            });
        }
        Ok(VesselDataset { vessel, items })
    }

    /// Flattened (item, view) index pairs for per-view stage-1 samples.
    pub fn view_samples(&self) -> Vec<(usize, usize)> {
        self.items
            .iter()
            .enumerate()
            .flat_map(|(i, item)| (0..item.views.len()).map(move |v| (i, v)))
            .collect()
    }
}

/// Loss and output-gradient for one prediction under the task.
fn loss_and_grad(task: Task, y: f64, target: f64) -> (f64, f64) {
    match task {
        Task::Syntax => {
            let diff = y - target;
            (diff * diff, 2.0 * diff)
        }
        Task::Dominance => {
            let p = sigmoid(y);
            let eps = 1e-12;
            let loss = -(target * (p + eps).ln() + (1.0 - target) * (1.0 - p + eps).ln());
            (loss, p - target)
        }
    }
}

/// Per-stage record of what training did; serialized into run metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: u8,
    pub lr_per_step: Vec<f64>,
    pub epoch_train_loss: Vec<f64>,
    /// Validation metric per epoch: RMSE in target space (or mean BCE).
    pub epoch_val_metric: Vec<f64>,
}

fn clip_seed(seed: u64, stage: u64, epoch: usize, item: usize, view: usize) -> u64 {
    sub_seed(
        seed,
        stage,
        ((epoch as u64) << 40) | ((item as u64) << 8) | view as u64,
    )
}

fn make_clip(
    model: &VesselModel,
    view: &View,
    policy: AugmentPolicy,
    seed: u64,
) -> Result<ndarray::Array4<f64>> {
    let (h, w) = model.backbone_cfg.input_size;
    Ok(view_to_clip(view, model.backbone_cfg.clip_len, h, w, policy, seed)?.frames)
}

// ---------------------------------------------------------------------------
// Stage 1: backbone on single views
// ---------------------------------------------------------------------------

/// Train the backbone on (view, score) pairs through a provisional affine
/// output head. Returns the provisional head parameters and the trace.
pub fn train_stage1_backbone(
    model: &mut VesselModel,
    data: &VesselDataset,
    cfg: &TrainConfig,
    task: Task,
) -> Result<(Vec<f64>, StageTrace)> {
    cfg.validate()?;
    let samples = data.view_samples();
    if samples.is_empty() {
        return Err(Error::Training("stage 1: no labeled views".into()));
    }
    // Provisional head: an affine map over the raw embedding (a mean head
    // over a single view degenerates to exactly that).
    let mut layout = ParamLayout::new();
    let prov = MeanHead::new(&mut layout, model.embed_dim());
    let mut prov_params = vec![0.0; layout.total_len()];
    prov.init(
        &mut prov_params,
        &mut ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 101, 0)),
    );

    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size_backbone);
    let schedule = OneCycle::new(
        cfg.lr_backbone,
        cfg.stage1_epochs * steps_per_epoch,
        cfg.one_cycle,
    );
    let mut adam_bb = Adam::new(model.backbone_params.len());
    let mut adam_head = Adam::new(prov_params.len());
    let mut trace = StageTrace {
        stage: 1,
        lr_per_step: Vec::new(),
        epoch_train_loss: Vec::new(),
        epoch_val_metric: Vec::new(),
    };
    let mut step = 0usize;
    for epoch in 0..cfg.stage1_epochs {
        let mut order = samples.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(
            cfg.seed,
            111,
            epoch as u64,
        )));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size_backbone) {
            let mut grads_bb = vec![0.0; model.backbone_params.len()];
            let mut grads_head = vec![0.0; prov_params.len()];
            for &(item_idx, view_idx) in batch {
                let item = &data.items[item_idx];
                let clip = make_clip(
                    model,
                    &item.views[view_idx],
                    cfg.augment,
                    clip_seed(cfg.seed, 1, epoch, item_idx, view_idx),
                )?;
                let (emb, cache) = model.backbone.forward_train(
                    &model.backbone_params,
                    &mut model.backbone_buffers,
                    &clip,
                );
                let embs = emb.insert_axis(ndarray::Axis(0));
                let (y, head_cache) = prov.forward(&prov_params, &embs);
                let (loss, d_y) = loss_and_grad(task, y, item.target);
                epoch_loss += loss;
                let d_embs = prov.backward(
                    &prov_params,
                    &head_cache,
                    d_y / batch.len() as f64,
                    &mut grads_head,
                );
                model.backbone.backward(
                    &model.backbone_params,
                    &cache,
                    &d_embs.row(0).to_owned(),
                    &mut grads_bb,
                );
            }
            let lr = schedule.lr_at(step);
            adam_bb.step(&mut model.backbone_params, &grads_bb, lr);
            adam_head.step(&mut prov_params, &grads_head, lr);
            trace.lr_per_step.push(lr);
            step += 1;
        }
        trace
            .epoch_train_loss
            .push(epoch_loss / samples.len() as f64);
    }
    Ok((prov_params, trace))
}

// ---------------------------------------------------------------------------
// Stage 2: head on frozen backbone
// ---------------------------------------------------------------------------

fn embed_item(
    model: &VesselModel,
    item: &TrainItem,
    policy: AugmentPolicy,
    seed: u64,
    epoch: usize,
    item_idx: usize,
) -> Result<Array2<f64>> {
    let embs: Vec<_> = item
        .views
        .iter()
        .enumerate()
        .map(|(v, view)| {
            let clip = make_clip(model, view, policy, clip_seed(seed, 2, epoch, item_idx, v))?;
            Ok(model
                .backbone
                .forward_eval(&model.backbone_params, &model.backbone_buffers, &clip))
        })
        .collect::<Result<Vec<_>>>()?;
    crate::model::stack_embeddings(&embs)
}

/// Mean task metric over a dataset given fixed embeddings.
fn head_val_metric(
    model: &VesselModel,
    embeddings: &[Array2<f64>],
    targets: &[f64],
    task: Task,
) -> f64 {
    if embeddings.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    for (embs, &target) in embeddings.iter().zip(targets) {
        let (y, _) = model
            .head
            .forward(&model.head_params, embs)
            .expect("validation embeddings are consistent");
        match task {
            Task::Syntax => total += (y - target) * (y - target),
            Task::Dominance => total += loss_and_grad(task, y, target).0,
        }
    }
    match task {
        Task::Syntax => (total / embeddings.len() as f64).sqrt(),
        Task::Dominance => total / embeddings.len() as f64,
    }
}

/// Train the fusion head and output affine on multi-view studies with the
/// backbone frozen. Backbone parameters and buffers are byte-identical
/// before and after.
pub fn train_stage2_head(
    model: &mut VesselModel,
    data: &VesselDataset,
    val: Option<&VesselDataset>,
    cfg: &TrainConfig,
    task: Task,
) -> Result<StageTrace> {
    cfg.validate()?;
    if data.items.is_empty() {
        return Err(Error::Training("stage 2: no labeled studies".into()));
    }
    let cache_embeddings = cfg.augment == AugmentPolicy::None;
    let fixed_embeddings: Vec<Array2<f64>> = if cache_embeddings {
        data.items
            .iter()
            .enumerate()
            .map(|(i, item)| embed_item(model, item, AugmentPolicy::None, cfg.seed, 0, i))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let val_data: Option<(Vec<Array2<f64>>, Vec<f64>)> = match val {
        Some(v) if !v.items.is_empty() => Some((
            v.items
                .iter()
                .enumerate()
                .map(|(i, item)| embed_item(model, item, AugmentPolicy::None, cfg.seed, 0, i))
                .collect::<Result<Vec<_>>>()?,
            v.items.iter().map(|i| i.target).collect(),
        )),
        _ => None,
    };

    let steps_per_epoch = data.items.len().div_ceil(cfg.batch_size_head);
    let schedule = OneCycle::new(
        cfg.lr_backbone,
        cfg.stage2_epochs * steps_per_epoch,
        cfg.one_cycle,
    );
    let mut adam = Adam::new(model.head_params.len());
    let mut trace = StageTrace {
        stage: 2,
        lr_per_step: Vec::new(),
        epoch_train_loss: Vec::new(),
        epoch_val_metric: Vec::new(),
    };
    let mut step = 0usize;
    for epoch in 0..cfg.stage2_epochs {
        let mut order: Vec<usize> = (0..data.items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(
            cfg.seed,
            222,
            epoch as u64,
        )));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size_head) {
            let mut grads = vec![0.0; model.head_params.len()];
            for &idx in batch {
                let embs = if cache_embeddings {
                    fixed_embeddings[idx].clone()
                } else {
                    embed_item(model, &data.items[idx], cfg.augment, cfg.seed, epoch + 1, idx)?
                };
                let (y, cache) = model.head.forward(&model.head_params, &embs)?;
                let (loss, d_y) = loss_and_grad(task, y, data.items[idx].target);
                epoch_loss += loss;
                let _ = model.head.backward(
                    &model.head_params,
                    &cache,
                    d_y / batch.len() as f64,
                    &mut grads,
                );
            }
            let lr = schedule.lr_at(step);
            adam.step(&mut model.head_params, &grads, lr);
            trace.lr_per_step.push(lr);
            step += 1;
        }
        trace
            .epoch_train_loss
            .push(epoch_loss / data.items.len() as f64);
        if let Some((embs, targets)) = &val_data {
            trace
                .epoch_val_metric
                .push(head_val_metric(model, embs, targets, task));
        }
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Stage 3: joint fine-tune
// ---------------------------------------------------------------------------

/// Where a branch's checkpoints live: `{run}/{vessel}/fold{i}/stage{s}/...`.
#[derive(Debug, Clone)]
pub struct BranchPaths {
    base: PathBuf,
}

impl BranchPaths {
    pub fn new(run_dir: &Path, vessel: Vessel, fold: usize) -> Self {
        BranchPaths {
            base: run_dir.join(vessel.as_str()).join(format!("fold{fold}")),
        }
    }

    pub fn stage_final(&self, stage: u8) -> PathBuf {
        self.base.join(format!("stage{stage}")).join("final.ckpt")
    }

    pub fn stage3_epoch(&self, epoch: usize) -> PathBuf {
        self.base.join("stage3").join(format!("epoch{epoch}.ckpt"))
    }

    pub fn stage3_best(&self) -> PathBuf {
        self.base.join("stage3").join("best.ckpt")
    }
}

/// Validation metric over full studies (fresh forward passes).
fn model_val_metric(model: &VesselModel, val: &VesselDataset, task: Task) -> Result<f64> {
    if val.items.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for item in &val.items {
        let views: Vec<&View> = item.views.iter().collect();
        let y = model.predict_raw(&views)?;
        match task {
            Task::Syntax => total += (y - item.target) * (y - item.target),
            Task::Dominance => total += loss_and_grad(task, y, item.target).0,
        }
    }
    Ok(match task {
        Task::Syntax => (total / val.items.len() as f64).sqrt(),
        Task::Dominance => total / val.items.len() as f64,
    })
}

#[allow(clippy::too_many_arguments)]
fn stage3_checkpoint(
    path: &Path,
    model: &VesselModel,
    adam_bb: &Adam,
    adam_head: &Adam,
    epoch: usize,
    step: usize,
    lr: f64,
    val_metric: f64,
) -> Result<()> {
    let meta = serde_json::json!({
        "stage": 3,
        "epoch": epoch,
        "step": step,
        "lr": lr,
        "val_metric": val_metric,
        "adam_t": adam_bb.t,
    });
    let sections = vec![
        vessel_model_section("model", model)?,
        Section {
            name: "optimizer".into(),
            config: serde_json::json!({}),
            tensors: vec![
                ("m_backbone".into(), &adam_bb.m),
                ("v_backbone".into(), &adam_bb.v),
                ("m_head".into(), &adam_head.m),
                ("v_head".into(), &adam_head.v),
            ],
        },
    ];
    crate::model::checkpoint::write_checkpoint(path, &meta, &sections)
}

/// Fine-tune backbone and head jointly at the reduced learning rate.
/// Checkpoints every epoch when `paths` is given; the best-validation
/// weights are restored into `model` at the end. `resume_from` restores
/// parameters, optimizer state and epoch position from a stage-3 epoch
/// checkpoint and continues.
pub fn train_stage3_finetune(
    model: &mut VesselModel,
    data: &VesselDataset,
    val: &VesselDataset,
    cfg: &TrainConfig,
    task: Task,
    paths: Option<&BranchPaths>,
    resume_from: Option<&Path>,
) -> Result<StageTrace> {
    cfg.validate()?;
    if data.items.is_empty() {
        return Err(Error::Training("stage 3: no labeled studies".into()));
    }
    let steps_per_epoch = data.items.len().div_ceil(cfg.batch_size_head);
    let schedule = OneCycle::new(
        cfg.lr_finetune,
        cfg.stage3_epochs * steps_per_epoch,
        cfg.one_cycle,
    );
    let mut adam_bb = Adam::new(model.backbone_params.len());
    let mut adam_head = Adam::new(model.head_params.len());
    let mut start_epoch = 0usize;
    let mut step = 0usize;
    if let Some(ckpt) = resume_from {
        let loaded = read_checkpoint(ckpt)?;
        let restored = vessel_model_from_section(loaded.section("model")?)?;
        if restored.config() != model.config() {
            return Err(Error::IncompatibleCheckpoint(
                "resume checkpoint was trained with a different model config".into(),
            ));
        }
        model.backbone_params = restored.backbone_params;
        model.backbone_buffers = restored.backbone_buffers;
        model.head_params = restored.head_params;
        let opt = loaded.section("optimizer")?;
        adam_bb.m = opt.tensor("m_backbone")?.to_vec();
        adam_bb.v = opt.tensor("v_backbone")?.to_vec();
        adam_head.m = opt.tensor("m_head")?.to_vec();
        adam_head.v = opt.tensor("v_head")?.to_vec();
        let meta = &loaded.meta;
        let epoch = meta["epoch"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("resume checkpoint missing epoch".into()))?
            as usize;
        step = meta["step"].as_u64().unwrap_or(0) as usize;
        adam_bb.t = meta["adam_t"].as_u64().unwrap_or(0);
        adam_head.t = adam_bb.t;
        start_epoch = epoch + 1;
    }

    let mut trace = StageTrace {
        stage: 3,
        lr_per_step: Vec::new(),
        epoch_train_loss: Vec::new(),
        epoch_val_metric: Vec::new(),
    };
    let mut best: Option<(f64, Vec<f64>, Vec<f64>, Vec<f64>, usize)> = None;
    let mut last_lr = 0.0;
    for epoch in start_epoch..cfg.stage3_epochs {
        let mut order: Vec<usize> = (0..data.items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(
            cfg.seed,
            333,
            epoch as u64,
        )));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size_head) {
            let mut grads_bb = vec![0.0; model.backbone_params.len()];
            let mut grads_head = vec![0.0; model.head_params.len()];
            for &idx in batch {
                let item = &data.items[idx];
                let mut embs = Vec::with_capacity(item.views.len());
                let mut caches = Vec::with_capacity(item.views.len());
                for (v, view) in item.views.iter().enumerate() {
                    let clip =
                        make_clip(model, view, cfg.augment, clip_seed(cfg.seed, 3, epoch, idx, v))?;
                    let (emb, cache) = model.backbone.forward_train(
                        &model.backbone_params,
                        &mut model.backbone_buffers,
                        &clip,
                    );
                    embs.push(emb);
                    caches.push(cache);
                }
                let emb_matrix = crate::model::stack_embeddings(&embs)?;
                let (y, head_cache) = model.head.forward(&model.head_params, &emb_matrix)?;
                let (loss, d_y) = loss_and_grad(task, y, item.target);
                epoch_loss += loss;
                let d_embs = model.head.backward(
                    &model.head_params,
                    &head_cache,
                    d_y / batch.len() as f64,
                    &mut grads_head,
                );
                for (v, cache) in caches.iter().enumerate() {
                    model.backbone.backward(
                        &model.backbone_params,
                        cache,
                        &d_embs.row(v).to_owned(),
                        &mut grads_bb,
                    );
                }
            }
            let lr = schedule.lr_at(step);
            adam_bb.step(&mut model.backbone_params, &grads_bb, lr);
            adam_head.step(&mut model.head_params, &grads_head, lr);
            trace.lr_per_step.push(lr);
            last_lr = lr;
            step += 1;
        }
        trace
            .epoch_train_loss
            .push(epoch_loss / data.items.len() as f64);
        let val_metric = model_val_metric(model, val, task)?;
        trace.epoch_val_metric.push(val_metric);
        if let Some(paths) = paths {
            stage3_checkpoint(
                &paths.stage3_epoch(epoch),
                model,
                &adam_bb,
                &adam_head,
                epoch,
                step,
                last_lr,
                val_metric,
            )?;
        }
        let is_better = match &best {
            None => true,
            Some((best_metric, ..)) => val_metric.is_finite() && val_metric < *best_metric,
        };
        if is_better {
            best = Some((
                val_metric,
                model.backbone_params.clone(),
                model.backbone_buffers.clone(),
                model.head_params.clone(),
                epoch,
            ));
        }
    }
    // Retain the best-validation weights.
    if let Some((metric, bb, buf, head, epoch)) = best {
        model.backbone_params = bb;
        model.backbone_buffers = buf;
        model.head_params = head;
        if let Some(paths) = paths {
            let meta = serde_json::json!({
                "stage": 3,
                "best_epoch": epoch,
                "val_metric": metric,
                "lr": cfg.lr_finetune,
            });
            crate::model::checkpoint::save_vessel_model(&paths.stage3_best(), model, &meta)?;
        }
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Threshold fitting
// ---------------------------------------------------------------------------

/// Result of threshold fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub tau: f64,
    pub macro_f1: f64,
    /// True when the validation labels were single-class and the default
    /// threshold was used.
    pub degenerate: bool,
}

/// Pick the total-score threshold maximizing macro-F1 of `pred > tau` over
/// candidate thresholds at the midpoints of the sorted predictions; ties
/// break toward the smallest tau. A single-class validation set yields the
/// default tau = 0.5 with a warning.
pub fn fit_threshold(pred_totals: &[f64], gt_nonzero: &[bool]) -> Result<ThresholdFit> {
    if pred_totals.len() != gt_nonzero.len() {
        return Err(Error::ShapeMismatch(
            "threshold fit inputs differ in length".into(),
        ));
    }
    if pred_totals.is_empty() {
        return Err(Error::Training("threshold fit on empty set".into()));
    }
    let n_pos = gt_nonzero.iter().filter(|&&f| f).count();
    if n_pos == 0 || n_pos == gt_nonzero.len() {
        log::warn!("threshold fit: single-class validation labels, using default tau = 0.5");
        return Ok(ThresholdFit {
            tau: 0.5,
            macro_f1: f64::NAN,
            degenerate: true,
        });
    }
    let mut sorted = pred_totals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite predictions"));
    let mut candidates: Vec<f64> = sorted.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
    candidates.dedup();
    let mut best: Option<(f64, f64)> = None; // (macro_f1, tau)
    for &tau in &candidates {
        let flags: Vec<bool> = pred_totals.iter().map(|&p| p > tau).collect();
        let report = classification_report(gt_nonzero, &flags, pred_totals)?;
        let better = match best {
            None => true,
            Some((best_f1, best_tau)) => {
                report.f1_macro > best_f1 || (report.f1_macro == best_f1 && tau < best_tau)
            }
        };
        if better {
            best = Some((report.f1_macro, tau));
        }
    }
    let (macro_f1, tau) = best.expect("at least one candidate");
    Ok(ThresholdFit {
        tau,
        macro_f1,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Cross-validation folds
// ---------------------------------------------------------------------------

/// K disjoint folds of study ids, stratified by the binary total > 0 label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
    pub stratified_by: String,
    pub seed: u64,
}

impl FoldPlan {
    /// Train/test id split for one fold.
    pub fn split(&self, fold: usize) -> (Vec<String>, Vec<String>) {
        let test = self.folds[fold].clone();
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, ids)| ids.iter().cloned())
            .collect();
        (train, test)
    }
}

/// Stratified k-fold assignment over the labeled studies of a manifest.
/// Deterministic in the seed; every labeled study lands in exactly one fold
/// and per-fold class shares match the global shares to within one study.
pub fn make_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config("k must be >= 2".into()));
    }
    let labeled: Vec<(&str, bool)> = manifest
        .studies
        .iter()
        .filter_map(|s| s.labels.syntax_total.map(|t| (s.id.as_str(), t > 0.0)))
        .collect();
    if labeled.len() < k {
        return Err(Error::Training(format!(
            "{} labeled studies cannot fill {k} folds",
            labeled.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zeros: Vec<&str> = labeled
        .iter()
        .filter(|(_, nz)| !nz)
        .map(|(id, _)| *id)
        .collect();
    let mut nonzeros: Vec<&str> = labeled
        .iter()
        .filter(|(_, nz)| *nz)
        .map(|(id, _)| *id)
        .collect();
    zeros.shuffle(&mut rng);
    nonzeros.shuffle(&mut rng);
    // Deal both strata round-robin with a continuing cursor so fold sizes
    // stay balanced and class shares match within one study.
    let mut folds = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for id in zeros.into_iter().chain(nonzeros) {
        folds[cursor % k].push(id.to_string());
        cursor += 1;
    }
    Ok(FoldPlan {
        folds,
        stratified_by: "total>0".into(),
        seed,
    })
}

/// Stratified train/validation split of studies by a binary label.
pub fn split_train_val<'a>(
    studies: &[&'a Study],
    val_fraction: f64,
    seed: u64,
    strata: impl Fn(&Study) -> bool,
) -> (Vec<&'a Study>, Vec<&'a Study>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<&Study> = studies.iter().copied().filter(|s| strata(s)).collect();
    let mut neg: Vec<&Study> = studies.iter().copied().filter(|s| !strata(s)).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for group in [pos, neg] {
        let n_val = (group.len() as f64 * val_fraction).round() as usize;
        let n_val = if group.len() > 1 {
            n_val.max(1).min(group.len() - 1)
        } else {
            0
        };
        for (i, s) in group.into_iter().enumerate() {
            if i < n_val {
                val.push(s);
            } else {
                train.push(s);
            }
        }
    }
    (train, val)
}

// ---------------------------------------------------------------------------
// Branch and split training
// ---------------------------------------------------------------------------

/// Model architecture for both branches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub head: FusionHeadConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            backbone: BackboneConfig::default(),
            head: FusionHeadConfig::recurrent(),
        }
    }
}

/// Train one vessel branch through all three stages.
#[allow(clippy::too_many_arguments)]
pub fn train_branch(
    vessel: Vessel,
    train_studies: &[&Study],
    val_studies: &[&Study],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    task: Task,
    branch_seed: u64,
    paths: Option<&BranchPaths>,
) -> Result<(VesselModel, Vec<StageTrace>)> {
    let owned_train: Vec<Study> = train_studies.iter().map(|s| (*s).clone()).collect();
    let owned_val: Vec<Study> = val_studies.iter().map(|s| (*s).clone()).collect();
    let data = VesselDataset::build(&owned_train, vessel, task)?;
    let val = VesselDataset::build(&owned_val, vessel, task)?;
    let mut model = VesselModel::new(vessel, spec.backbone, spec.head, branch_seed)?;
    let branch_cfg = TrainConfig {
        seed: branch_seed,
        ..cfg.clone()
    };
    let (_prov, t1) = train_stage1_backbone(&mut model, &data, &branch_cfg, task)?;
    if let Some(p) = paths {
        crate::model::checkpoint::save_vessel_model(
            &p.stage_final(1),
            &model,
            &serde_json::json!({"stage": 1, "lr": branch_cfg.lr_backbone}),
        )?;
    }
    let t2 = train_stage2_head(&mut model, &data, Some(&val), &branch_cfg, task)?;
    if let Some(p) = paths {
        crate::model::checkpoint::save_vessel_model(
            &p.stage_final(2),
            &model,
            &serde_json::json!({"stage": 2, "lr": branch_cfg.lr_backbone}),
        )?;
    }
    let t3 = train_stage3_finetune(&mut model, &data, &val, &branch_cfg, task, paths, None)?;
    Ok((model, vec![t1, t2, t3]))
}

/// One row of the predictions table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub study_id: String,
    pub pred_rca: f64,
    pub pred_lca: f64,
    pub pred_total: f64,
    pub pred_nonzero: bool,
    pub gt_rca: Option<f64>,
    pub gt_lca: Option<f64>,
    pub gt_total: Option<f64>,
}

/// Predict every study with a trained predictor.
pub fn predict_rows(predictor: &StudyPredictor, studies: &[&Study]) -> Result<Vec<PredictionRow>> {
    studies
        .iter()
        .map(|study| {
            let pred = crate::model::predict_study(study, predictor)?;
            Ok(PredictionRow {
                study_id: study.study_id.clone(),
                pred_rca: pred.score_rca,
                pred_lca: pred.score_lca,
                pred_total: pred.score_total,
                pred_nonzero: pred.nonzero,
                gt_rca: study.labels.syntax_rca,
                gt_lca: study.labels.syntax_lca,
                gt_total: study.labels.syntax_total,
            })
        })
        .collect()
}

/// Full-population, nonzero-subgroup and classification reports from
/// prediction rows carrying ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub regression_all: RegressionReport,
    pub regression_nonzero: Option<RegressionReport>,
    pub classification: ClassificationReport,
}

pub fn evaluate_rows(rows: &[PredictionRow]) -> Result<EvalReport> {
    let labeled: Vec<&PredictionRow> = rows.iter().filter(|r| r.gt_total.is_some()).collect();
    if labeled.len() < 2 {
        return Err(Error::UndefinedMetric(
            "evaluation needs >= 2 labeled studies".into(),
        ));
    }
    let gt: Vec<f64> = labeled.iter().map(|r| r.gt_total.unwrap()).collect();
    let pred: Vec<f64> = labeled.iter().map(|r| r.pred_total).collect();
    let pred_flags: Vec<bool> = labeled.iter().map(|r| r.pred_nonzero).collect();
    let inputs = EvalInputs::new(gt.clone(), pred.clone(), pred_flags.clone())?;
    let gt_flags = inputs.gt_flags();
    let regression_all = regression_report(&gt, &pred)?;
    let regression_nonzero = match subgroup_eval(&inputs, |g| g > 0.0) {
        Ok((reg, _)) => Some(reg),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("nonzero subgroup report unavailable: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let classification = classification_report(&gt_flags, &pred_flags, &pred)?;
    Ok(EvalReport {
        regression_all,
        regression_nonzero,
        classification,
    })
}

/// Train both branches on a single train/validation split and fit the
/// decision threshold on the validation predictions.
pub fn train_split(
    train_studies: &[&Study],
    val_studies: &[&Study],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    fold: usize,
    run_dir: Option<&Path>,
) -> Result<(StudyPredictor, Vec<(Vessel, Vec<StageTrace>)>)> {
    let mut traces = Vec::new();
    let mut branches = Vec::new();
    for vessel in Vessel::BOTH {
        let paths = run_dir.map(|d| BranchPaths::new(d, vessel, fold));
        let branch_seed = sub_seed(cfg.seed, 1000 + fold as u64, vessel as u64);
        let (model, t) = train_branch(
            vessel,
            train_studies,
            val_studies,
            spec,
            cfg,
            Task::Syntax,
            branch_seed,
            paths.as_ref(),
        )?;
        traces.push((vessel, t));
        branches.push(model);
    }
    let mut branches = branches.into_iter();
    let mut predictor = StudyPredictor {
        rca: branches.next().expect("rca branch"),
        lca: branches.next().expect("lca branch"),
        threshold: 0.5,
    };
    // Fit tau on validation predictions.
    let val_rows = predict_rows(&predictor, val_studies)?;
    let pred: Vec<f64> = val_rows.iter().map(|r| r.pred_total).collect();
    let gt_flags: Vec<bool> = val_rows
        .iter()
        .map(|r| r.gt_total.map(|t| t > 0.0).unwrap_or(false))
        .collect();
    let fit = fit_threshold(&pred, &gt_flags)?;
    predictor.threshold = fit.tau;
    if let Some(dir) = run_dir {
        save_predictor(
            &dir.join(format!("fold{fold}_predictor.ckpt")),
            &predictor,
            &serde_json::json!({"fold": fold, "threshold_fit": fit}),
        )?;
    }
    Ok((predictor, traces))
}

// ---------------------------------------------------------------------------
// Cross-validation driver
// ---------------------------------------------------------------------------

/// Per-fold evaluation plus the mean +/- sample-STD aggregate rows.
#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldEval>,
    pub aggregate_all: Vec<(String, Aggregate)>,
    pub aggregate_nonzero: Vec<(String, Aggregate)>,
    pub aggregate_classification: Vec<(String, Aggregate)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldEval {
    pub fold: usize,
    pub n_test: usize,
    pub threshold: f64,
    pub eval: EvalReport,
}

fn studies_by_id<'a>(studies: &'a [Study], ids: &[String]) -> Vec<&'a Study> {
    let set: std::collections::HashSet<&str> = ids.iter().map(|s| s.as_str()).collect();
    studies
        .iter()
        .filter(|s| set.contains(s.study_id.as_str()))
        .collect()
}

/// Run stratified k-fold cross-validation of the score-regression task.
/// Returns the report along with every fold's predictor and prediction rows.
pub fn run_cv(
    studies: &[Study],
    manifest: &Manifest,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(CvReport, Vec<StudyPredictor>, Vec<Vec<PredictionRow>>)> {
    let plan = make_folds(manifest, cfg.k_folds, cfg.seed)?;
    let mut folds = Vec::new();
    let mut predictors = Vec::new();
    let mut fold_rows = Vec::new();
    for fold in 0..plan.folds.len() {
        let (train_ids, test_ids) = plan.split(fold);
        let trainval = studies_by_id(studies, &train_ids);
        let test = studies_by_id(studies, &test_ids);
        let (train, val) = split_train_val(
            &trainval,
            cfg.val_fraction,
            sub_seed(cfg.seed, 777, fold as u64),
            |s| s.labels.syntax_total.map(|t| t > 0.0).unwrap_or(false),
        );
        let (predictor, _traces) = train_split(&train, &val, spec, cfg, fold, run_dir)?;
        let rows = predict_rows(&predictor, &test)?;
        let eval = evaluate_rows(&rows)?;
        folds.push(FoldEval {
            fold,
            n_test: test.len(),
            threshold: predictor.threshold,
            eval,
        });
        predictors.push(predictor);
        fold_rows.push(rows);
    }
    let report = aggregate_cv(folds)?;
    Ok((report, predictors, fold_rows))
}

/// Build the aggregate rows from per-fold evaluations.
pub fn aggregate_cv(folds: Vec<FoldEval>) -> Result<CvReport> {
    let all: Vec<_> = folds
        .iter()
        .map(|f| f.eval.regression_all.metric_map())
        .collect();
    let nonzero: Vec<_> = folds
        .iter()
        .filter_map(|f| f.eval.regression_nonzero.as_ref().map(|r| r.metric_map()))
        .collect();
    let cls: Vec<_> = folds
        .iter()
        .map(|f| f.eval.classification.metric_map())
        .collect();
    Ok(CvReport {
        aggregate_all: cross_val_aggregate(&all)?,
        aggregate_nonzero: if nonzero.len() >= 2 {
            cross_val_aggregate(&nonzero)?
        } else {
            Vec::new()
        },
        aggregate_classification: cross_val_aggregate(&cls)?,
        folds,
    })
}

/// Evaluate an ensemble of per-fold predictors on an external study set,
/// reporting per-model metrics and their mean +/- sample STD. This is the
/// domain-shift protocol: the k fold models each score the full external
/// set.
#[allow(clippy::type_complexity)]
pub fn domain_shift_eval(
    predictors: &[StudyPredictor],
    studies: &[&Study],
) -> Result<(
    Vec<EvalReport>,
    Vec<(String, Aggregate)>,
    Vec<(String, Aggregate)>,
)> {
    if predictors.len() < 2 {
        return Err(Error::Config(
            "domain-shift evaluation needs >= 2 fold models".into(),
        ));
    }
    let mut reports = Vec::new();
    for predictor in predictors {
        let rows = predict_rows(predictor, studies)?;
        reports.push(evaluate_rows(&rows)?);
    }
    let reg: Vec<_> = reports
        .iter()
        .map(|r| r.regression_all.metric_map())
        .collect();
    let cls: Vec<_> = reports
        .iter()
        .map(|r| r.classification.metric_map())
        .collect();
    Ok((
        reports,
        cross_val_aggregate(&reg)?,
        cross_val_aggregate(&cls)?,
    ))
}

// ---------------------------------------------------------------------------
// Dominance task
// ---------------------------------------------------------------------------

/// Per-fold dominance classification report.
#[derive(Debug, Clone, Serialize)]
pub struct DominanceCvReport {
    pub folds: Vec<ClassificationReport>,
    pub aggregate: Vec<(String, Aggregate)>,
}

/// Cross-validated left/right dominance classification on the RCA branch.
/// Folds are stratified by the dominance label itself; the probability
/// threshold is fixed at 0.5.
pub fn run_cv_dominance(
    studies: &[Study],
    spec: &ModelSpec,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<DominanceCvReport> {
    let labeled: Vec<&Study> = studies
        .iter()
        .filter(|s| s.labels.dominance.is_some() && !views_by_vessel(s, Vessel::Rca).is_empty())
        .collect();
    if labeled.len() < cfg.k_folds {
        return Err(Error::Training(format!(
            "{} dominance-labeled studies cannot fill {} folds",
            labeled.len(),
            cfg.k_folds
        )));
    }
    // Stratified fold assignment on the dominance label.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut left: Vec<&Study> = labeled
        .iter()
        .copied()
        .filter(|s| s.labels.dominance == Some(Dominance::Left))
        .collect();
    let mut right: Vec<&Study> = labeled
        .iter()
        .copied()
        .filter(|s| s.labels.dominance == Some(Dominance::Right))
        .collect();
    left.shuffle(&mut rng);
    right.shuffle(&mut rng);
    let mut folds: Vec<Vec<&Study>> = vec![Vec::new(); cfg.k_folds];
    for (i, s) in left.into_iter().chain(right).enumerate() {
        folds[i % cfg.k_folds].push(s);
    }

    let mut reports = Vec::new();
    for fold in 0..cfg.k_folds {
        let test: Vec<&Study> = folds[fold].clone();
        let trainval: Vec<&Study> = folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, s)| s.iter().copied())
            .collect();
        let (train, val) = split_train_val(
            &trainval,
            cfg.val_fraction,
            sub_seed(cfg.seed, 888, fold as u64),
            |s| s.labels.dominance == Some(Dominance::Left),
        );
        let paths = run_dir.map(|d| BranchPaths::new(d, Vessel::Rca, fold));
        let (model, _traces) = train_branch(
            Vessel::Rca,
            &train,
            &val,
            spec,
            cfg,
            Task::Dominance,
            sub_seed(cfg.seed, 2000 + fold as u64, 0),
            paths.as_ref(),
        )?;
        let mut y = Vec::new();
        let mut flags = Vec::new();
        let mut probs = Vec::new();
        for study in &test {
            let views = views_by_vessel(study, Vessel::Rca);
            let p = crate::model::predict_dominance(&views, &model)?;
            probs.push(p);
            flags.push(p > 0.5);
            y.push(study.labels.dominance == Some(Dominance::Left));
        }
        reports.push(classification_report(&y, &flags, &probs)?);
    }
    let maps: Vec<_> = reports.iter().map(|r| r.metric_map()).collect();
    Ok(DominanceCvReport {
        aggregate: cross_val_aggregate(&maps)?,
        folds: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneVariant;
    use crate::study::{Labels, StudyRecord, ViewRecord};
    use crate::synth::{gen_study, SynthConfig};

    fn micro_spec() -> ModelSpec {
        ModelSpec {
            backbone: BackboneConfig {
                variant: BackboneVariant::Tiny3d,
                embed_dim: 16,
                input_size: (24, 24),
                clip_len: 8,
            },
            head: FusionHeadConfig::recurrent(),
        }
    }

    fn micro_synth(n: usize, seed: u64) -> Vec<Study> {
        let config = SynthConfig {
            n_studies: n,
            frames: (8, 10),
            height: 24,
            width: 24,
            views_rca: (1, 1),
            views_lca: (2, 2),
            zero_fraction_total: 0.4,
            zero_fraction_rca: 0.7,
            zero_fraction_lca: 0.5,
            seed,
            ..Default::default()
        };
        (0..n).map(|i| gen_study(&config, i).unwrap()).collect()
    }

    fn micro_cfg() -> TrainConfig {
        TrainConfig {
            stage1_epochs: 2,
            stage2_epochs: 3,
            stage3_epochs: 2,
            batch_size_backbone: 4,
            batch_size_head: 4,
            seed: 5,
            ..Default::default()
        }
    }

    fn manifest_with_labels(zeros: usize, nonzeros: usize) -> Manifest {
        let mut studies = Vec::new();
        for i in 0..zeros + nonzeros {
            let score = if i < zeros { 0.0 } else { 10.0 };
            studies.push(StudyRecord {
                id: format!("p{i}"),
                views: vec![ViewRecord {
                    vessel: Vessel::Rca,
                    path: format!("studies/p{i}/view_00"),
                    frame_rate: 15,
                }],
                labels: Labels {
                    syntax_total: Some(score),
                    syntax_rca: Some(score),
                    syntax_lca: Some(0.0),
                    dominance: None,
                    bypass: false,
                },
            });
        }
        Manifest {
            version: 1,
            studies,
        }
    }

    #[test]
    fn one_cycle_shape() {
        let sched = OneCycle::new(1e-4, 100, OneCycleConfig::default());
        let lrs: Vec<f64> = (0..100).map(|s| sched.lr_at(s)).collect();
        // Starts at peak / div, peaks at the warmup boundary, ends near 0.
        assert!((lrs[0] - 1e-4 / 25.0).abs() / 1e-4 < 0.3);
        let peak_step = 29; // warmup_frac 0.3 of 100 steps
        assert!((lrs[peak_step] - 1e-4).abs() < 1e-6);
        assert!(lrs[99] < 1e-7);
        // Monotone up during warmup, monotone down after.
        assert!(lrs.windows(2).take(peak_step).all(|w| w[1] >= w[0]));
        assert!(lrs.windows(2).skip(peak_step).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn make_folds_counts_100_studies() {
        let manifest = manifest_with_labels(52, 48);
        let plan = make_folds(&manifest, 5, 3).unwrap();
        assert_eq!(plan.folds.len(), 5);
        let zero_ids: std::collections::HashSet<String> =
            (0..52).map(|i| format!("p{i}")).collect();
        for fold in &plan.folds {
            assert_eq!(fold.len(), 20);
            let zeros = fold.iter().filter(|id| zero_ids.contains(*id)).count();
            assert!((10..=11).contains(&zeros), "fold has {zeros} zero studies");
        }
        // Disjoint and complete.
        let mut all: Vec<&String> = plan.folds.iter().flatten().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn make_folds_deterministic() {
        let manifest = manifest_with_labels(30, 20);
        let a = make_folds(&manifest, 5, 9).unwrap();
        let b = make_folds(&manifest, 5, 9).unwrap();
        assert_eq!(a, b);
        let c = make_folds(&manifest, 5, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn make_folds_rejects_too_few_studies() {
        let manifest = manifest_with_labels(2, 1);
        assert!(make_folds(&manifest, 5, 0).is_err());
    }

    #[test]
    fn fit_threshold_separable() {
        let preds = [0.1, 0.2, 5.0, 9.0];
        let flags = [false, false, true, true];
        let fit = fit_threshold(&preds, &flags).unwrap();
        assert!(fit.tau > 0.2 && fit.tau < 5.0);
        assert_eq!(fit.macro_f1, 1.0);
        assert!(!fit.degenerate);
    }

    #[test]
    fn fit_threshold_constant_predictions_tie_break() {
        let preds = [0.0, 0.0, 0.0, 0.0];
        let flags = [false, true, false, true];
        let fit = fit_threshold(&preds, &flags).unwrap();
        // All candidates coincide at the constant value; smallest wins.
        assert_eq!(fit.tau, 0.0);
    }

    #[test]
    fn fit_threshold_single_class_defaults() {
        let preds = [1.0, 2.0, 3.0];
        let flags = [true, true, true];
        let fit = fit_threshold(&preds, &flags).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.tau, 0.5);
    }

    #[test]
    fn stage1_constant_targets_converge() {
        // All-zero scores: the optimum is the constant 0 prediction.
        let config = SynthConfig {
            n_studies: 6,
            zero_fraction_total: 1.0,
            frames: (8, 8),
            height: 24,
            width: 24,
            views_rca: (1, 1),
            views_lca: (1, 1),
            seed: 11,
            ..Default::default()
        };
        let studies: Vec<Study> = (0..6).map(|i| gen_study(&config, i).unwrap()).collect();
        let data = VesselDataset::build(&studies, Vessel::Rca, Task::Syntax).unwrap();
        let spec = micro_spec();
        let mut model = VesselModel::new(Vessel::Rca, spec.backbone, spec.head, 1).unwrap();
        let cfg = TrainConfig {
            stage1_epochs: 5,
            batch_size_backbone: 6,
            lr_backbone: 1e-3,
            seed: 2,
            ..Default::default()
        };
        let (prov, trace) = train_stage1_backbone(&mut model, &data, &cfg, Task::Syntax).unwrap();
        let last = *trace.epoch_train_loss.last().unwrap();
        assert!(
            last.sqrt() < 0.05,
            "train RMSE {} not < 0.05 in log space",
            last.sqrt()
        );
        assert!(prov.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stage1_smoke_loss_decreases() {
        let studies = micro_synth(8, 21);
        let data = VesselDataset::build(&studies, Vessel::Lca, Task::Syntax).unwrap();
        let spec = micro_spec();
        let mut model = VesselModel::new(Vessel::Lca, spec.backbone, spec.head, 3).unwrap();
        let cfg = TrainConfig {
            stage1_epochs: 4,
            batch_size_backbone: 8,
            lr_backbone: 1e-3,
            seed: 4,
            ..Default::default()
        };
        let (_, trace) = train_stage1_backbone(&mut model, &data, &cfg, Task::Syntax).unwrap();
        assert!(
            trace.epoch_train_loss.last().unwrap() < trace.epoch_train_loss.first().unwrap(),
            "loss did not decrease: {:?}",
            trace.epoch_train_loss
        );
        assert!(trace.epoch_train_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn stage1_empty_dataset_errors() {
        let data = VesselDataset {
            vessel: Vessel::Rca,
            items: vec![],
        };
        let spec = micro_spec();
        let mut model = VesselModel::new(Vessel::Rca, spec.backbone, spec.head, 1).unwrap();
        assert!(matches!(
            train_stage1_backbone(&mut model, &data, &micro_cfg(), Task::Syntax),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn stage2_freezes_backbone_bytes() {
        let studies = micro_synth(6, 31);
        let data = VesselDataset::build(&studies, Vessel::Lca, Task::Syntax).unwrap();
        let spec = micro_spec();
        let mut model = VesselModel::new(Vessel::Lca, spec.backbone, spec.head, 7).unwrap();
        let before: Vec<u64> = model.backbone_params.iter().map(|v| v.to_bits()).collect();
        let buffers_before = model.backbone_buffers.clone();
        let trace = train_stage2_head(&mut model, &data, None, &micro_cfg(), Task::Syntax).unwrap();
        let after: Vec<u64> = model.backbone_params.iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after, "backbone bytes changed during stage 2");
        assert_eq!(buffers_before, model.backbone_buffers);
        assert!(trace.epoch_train_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn stage2_mean_head_trains_output_affine_only() {
        // The mean head's only parameters are the output affine; training
        // must move them and nothing else exists to move.
        let studies = micro_synth(6, 41);
        let data = VesselDataset::build(&studies, Vessel::Lca, Task::Syntax).unwrap();
        let spec = ModelSpec {
            head: FusionHeadConfig::Mean,
            ..micro_spec()
        };
        let mut model = VesselModel::new(Vessel::Lca, spec.backbone, spec.head, 7).unwrap();
        assert_eq!(model.head_params.len(), model.embed_dim() + 1);
        let before = model.head_params.clone();
        train_stage2_head(&mut model, &data, None, &micro_cfg(), Task::Syntax).unwrap();
        assert_ne!(before, model.head_params);
    }

    #[test]
    fn stage3_checkpoints_resume_exactly() {
        let studies = micro_synth(6, 51);
        let owned_train: Vec<Study> = studies.iter().take(4).cloned().collect();
        let owned_val: Vec<Study> = studies.iter().skip(4).cloned().collect();
        let data = VesselDataset::build(&owned_train, Vessel::Lca, Task::Syntax).unwrap();
        let val = VesselDataset::build(&owned_val, Vessel::Lca, Task::Syntax).unwrap();
        let spec = micro_spec();
        let cfg = TrainConfig {
            stage3_epochs: 3,
            ..micro_cfg()
        };

        let dir = tempfile::tempdir().unwrap();
        let paths = BranchPaths::new(dir.path(), Vessel::Lca, 0);
        let mut straight = VesselModel::new(Vessel::Lca, spec.backbone, spec.head, 9).unwrap();
        train_stage3_finetune(
            &mut straight,
            &data,
            &val,
            &cfg,
            Task::Syntax,
            Some(&paths),
            None,
        )
        .unwrap();

        // Resume from the epoch-0 checkpoint and train the remaining epochs.
        let mut resumed = VesselModel::new(Vessel::Lca, spec.backbone, spec.head, 9).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let paths2 = BranchPaths::new(dir2.path(), Vessel::Lca, 0);
        train_stage3_finetune(
            &mut resumed,
            &data,
            &val,
            &cfg,
            Task::Syntax,
            Some(&paths2),
            Some(&paths.stage3_epoch(0)),
        )
        .unwrap();
        assert_eq!(straight.backbone_params, resumed.backbone_params);
        assert_eq!(straight.head_params, resumed.head_params);

        // Checkpoint metadata records the fine-tune learning rate.
        let best = read_checkpoint(&paths.stage3_best()).unwrap();
        assert_eq!(best.meta["lr"].as_f64().unwrap(), cfg.lr_finetune);
        let e0 = read_checkpoint(&paths.stage3_epoch(0)).unwrap();
        assert_eq!(e0.meta["epoch"].as_u64().unwrap(), 0);
    }

    #[test]
    fn stage3_retains_best_validation_epoch() {
        let studies = micro_synth(8, 61);
        let train: Vec<Study> = studies.iter().take(6).cloned().collect();
        let val_studies: Vec<Study> = studies.iter().skip(6).cloned().collect();
        let data = VesselDataset::build(&train, Vessel::Lca, Task::Syntax).unwrap();
        let val = VesselDataset::build(&val_studies, Vessel::Lca, Task::Syntax).unwrap();
        let spec = micro_spec();
        let mut model = VesselModel::new(Vessel::Lca, spec.backbone, spec.head, 13).unwrap();
        let cfg = TrainConfig {
            stage3_epochs: 3,
            ..micro_cfg()
        };
        let trace =
            train_stage3_finetune(&mut model, &data, &val, &cfg, Task::Syntax, None, None).unwrap();
        let best_metric = trace
            .epoch_val_metric
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let final_metric = model_val_metric(&model, &val, Task::Syntax).unwrap();
        assert!(
            (final_metric - best_metric).abs() < 1e-9,
            "retained model metric {final_metric} != best {best_metric}"
        );
    }

    #[test]
    fn dataset_build_skips_unlabeled_and_viewless() {
        let mut studies = micro_synth(4, 71);
        studies[0].labels.syntax_lca = None;
        studies[1].views.retain(|v| v.vessel == Vessel::Rca);
        let data = VesselDataset::build(&studies, Vessel::Lca, Task::Syntax).unwrap();
        assert_eq!(data.items.len(), 2);
    }

    #[test]
    fn split_train_val_keeps_both_classes_in_val() {
        let studies = micro_synth(12, 81);
        let refs: Vec<&Study> = studies.iter().collect();
        let (train, val) = split_train_val(&refs, 0.25, 3, |s| {
            s.labels.syntax_total.map(|t| t > 0.0).unwrap_or(false)
        });
        assert_eq!(train.len() + val.len(), 12);
        let val_pos = val
            .iter()
            .filter(|s| s.labels.syntax_total.unwrap() > 0.0)
            .count();
        assert!(val_pos >= 1 && val_pos < val.len());
        // Disjoint.
        for v in &val {
            assert!(!train.iter().any(|t| t.study_id == v.study_id));
        }
    }
}
