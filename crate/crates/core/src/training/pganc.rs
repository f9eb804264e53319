use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adversarial::{train_gan, GanTrainConfig};
use super::batch::{gather, stratified_batches};
use super::losses::{class_balanced_weights, labeled_classes};
use super::report::{EarlyStop, LossReport};
use super::{sub_seed, OptimConfig};
use crate::data::{features_of, FeatureVector, Label, Sample};
use crate::diffnet::{adam_step, AdamConfig, AdamState, BnMode, Module, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{batch_tensor, ArchConfig, Branch, FrontKind, GanModel, Modes, PgancModel};

/// Settings of the two-stage classifier scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgancConfig {
    pub gan: GanTrainConfig,
    /// Stage 1 classifier on frozen branches.
    pub classifier: OptimConfig,
    /// Stage 2 end-to-end fine-tuning.
    pub stage2: OptimConfig,
}

impl Default for PgancConfig {
    fn default() -> Self {
        let classifier = OptimConfig::default();
        PgancConfig {
            gan: GanTrainConfig::default(),
            classifier,
            stage2: OptimConfig {
                lr: 0.1 * classifier.lr,
                ..classifier
            },
        }
    }
}

impl PgancConfig {
    pub fn validate(&self) -> Result<()> {
        self.gan.validate()?;
        self.classifier.validate()?;
        self.stage2.validate()
    }
}

/// Sample ids seen by each trained component.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataFlowLog {
    pub seen: BTreeMap<String, Vec<usize>>,
}

impl DataFlowLog {
    pub fn record(&mut self, component: &str, ids: impl IntoIterator<Item = usize>) {
        self.seen
            .entry(component.to_string())
            .or_default()
            .extend(ids);
    }

    pub fn ids(&self, component: &str) -> &[usize] {
        self.seen.get(component).map_or(&[], Vec::as_slice)
    }
}

/// The two branches after class-partitioned GAN training.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub normal: Branch,
    pub icing: Branch,
    pub report: LossReport,
    pub data_flow: DataFlowLog,
}

fn split_by_class(train: &[Sample]) -> Result<(Vec<Sample>, Vec<Sample>)> {
    labeled_classes(train)?;
    let normal: Vec<Sample> = train
        .iter()
        .filter(|s| s.label == Label::Normal)
        .cloned()
        .collect();
    let icing: Vec<Sample> = train
        .iter()
        .filter(|s| s.label == Label::Icing)
        .cloned()
        .collect();
    if normal.is_empty() || icing.is_empty() {
        return Err(Error::Usage(format!(
            "training set needs both classes, got {} normal and {} icing",
            normal.len(),
            icing.len()
        )));
    }
    Ok((normal, icing))
}

/// Trains a fresh normal GAN on normal samples only and a fresh icing GAN on
/// icing samples only.
pub fn pretrain_branches(
    train: &[Sample],
    arch: &ArchConfig,
    cfg: &GanTrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    let (normal, icing) = split_by_class(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 10));
    let mut gan_n = GanModel::new("gan_normal", arch.leaky_slope, &mut rng);
    let mut gan_ic = GanModel::new("gan_icing", arch.leaky_slope, &mut rng);
    let mut report = train_gan(&mut gan_n, &normal, Label::Normal, cfg, sub_seed(seed, 11))?;
    report.extend(train_gan(
        &mut gan_ic,
        &icing,
        Label::Icing,
        cfg,
        sub_seed(seed, 12),
    )?);
    let mut data_flow = DataFlowLog::default();
    data_flow.record("gan_normal", normal.iter().map(|s| s.id));
    data_flow.record("gan_icing", icing.iter().map(|s| s.id));
    Ok(Pretrained {
        normal: Branch::Gan(gan_n),
        icing: Branch::Gan(gan_ic),
        report,
        data_flow,
    })
}

/// Eval-mode concatenated branch features, one `8×2×22` block per sample.
fn frozen_features(model: &PgancModel, xs: &[FeatureVector]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in xs.chunks(512) {
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(chunk)?);
        let f = model.features(&mut tape, x, BnMode::Eval)?;
        out.extend_from_slice(tape.value(f).data());
    }
    Ok(out)
}

/// Trains only the classifier head on precomputed features of frozen branches.
pub fn train_classifier_frozen(
    model: &mut PgancModel,
    train: &[Sample],
    cfg: &OptimConfig,
    seed: u64,
) -> Result<LossReport> {
    cfg.validate()?;
    let classes = labeled_classes(train)?;
    let features = frozen_features(model, &features_of(train))?;
    let per = features.len() / train.len().max(1);
    let item_shape = [8usize, 2, 22];
    if per != item_shape.iter().product::<usize>() {
        return Err(Error::shape(
            "frozen features",
            "352 values per sample",
            format!("{per}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut stop = EarlyStop::new(cfg.patience);
    let mut report = LossReport::new();
    for epoch in 1..=cfg.epochs {
        let batches = stratified_batches(&classes, cfg.batch_size, &mut rng)?;
        let mut sum = 0.0;
        for idx in &batches {
            let data: Vec<f64> = idx
                .iter()
                .flat_map(|&i| features[i * per..(i + 1) * per].iter().copied())
                .collect();
            let ys: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
            let mut tape = Tape::new();
            let f = tape.constant(Tensor::new(&[idx.len(), 8, 2, 22], data)?);
            let p = model.classify(&mut tape, f, BnMode::Train)?;
            let loss = tape.weighted_nll(p, &ys, &class_balanced_weights(&ys)?)?;
            let grads = tape.backward(loss)?;
            let head: Vec<_> = model
                .layers_mut()
                .into_iter()
                .filter(|l| PgancModel::is_classifier_param(&l.name))
                .collect();
            adam_step(head, grads.params(), &mut state)?;
            model.absorb_stats(tape.stat_updates());
            model.apply_precision(cfg.precision);
            sum += tape.value(loss).item();
        }
        let mean = sum / batches.len() as f64;
        report.push(epoch, "stage1.L_CNN", mean)?;
        if stop.update(mean) {
            break;
        }
    }
    Ok(report)
}

/// Minimizes the class-balanced loss over every parameter. `branch_mode`
/// sets the branch batchnorm behaviour: `Eval` keeps the running statistics
/// of pretrained branches, `Train` suits branches trained from scratch.
pub fn train_end_to_end(
    model: &mut PgancModel,
    train: &[Sample],
    cfg: &OptimConfig,
    branch_mode: BnMode,
    tag: &str,
    seed: u64,
) -> Result<LossReport> {
    cfg.validate()?;
    let classes = labeled_classes(train)?;
    let xs = features_of(train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut stop = EarlyStop::new(cfg.patience);
    let mut report = LossReport::new();
    let modes = Modes {
        branches: branch_mode,
        head: BnMode::Train,
    };
    let name = format!("{tag}.L_CNN");
    for epoch in 1..=cfg.epochs {
        let batches = stratified_batches(&classes, cfg.batch_size, &mut rng)?;
        let mut sum = 0.0;
        for idx in &batches {
            let ys: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(gather(&xs, idx)?);
            let p = model.forward(&mut tape, x, modes)?;
            let loss = tape.weighted_nll(p, &ys, &class_balanced_weights(&ys)?)?;
            let grads = tape.backward(loss)?;
            adam_step(model.layers_mut(), grads.params(), &mut state)?;
            model.absorb_stats(tape.stat_updates());
            model.apply_precision(cfg.precision);
            sum += tape.value(loss).item();
        }
        let mean = sum / batches.len() as f64;
        report.push(epoch, name.clone(), mean)?;
        if stop.update(mean) {
            break;
        }
    }
    Ok(report)
}

/// Both stage checkpoints of the two-stage scheme.
#[derive(Debug, Clone)]
pub struct PgancOutcome {
    pub stage1: PgancModel,
    pub stage2: PgancModel,
    pub report: LossReport,
    pub data_flow: DataFlowLog,
}

/// Stage 1 trains each GAN on its own class and then the classifier on
/// frozen branches; stage 2 fine-tunes the whole network from there.
pub fn train_two_stage_pganc(
    train: &[Sample],
    arch: &ArchConfig,
    cfg: &PgancConfig,
    seed: u64,
) -> Result<PgancOutcome> {
    cfg.validate()?;
    if arch.front != FrontKind::Gan {
        return Err(Error::Config(
            "two-stage training needs GAN branches".into(),
        ));
    }
    let pre = pretrain_branches(train, arch, &cfg.gan, seed)?;
    train_two_stage_from(pre, train, arch, cfg, seed)
}

/// The classifier stage and stage 2 on already pretrained branches.
pub fn train_two_stage_from(
    pre: Pretrained,
    train: &[Sample],
    arch: &ArchConfig,
    cfg: &PgancConfig,
    seed: u64,
) -> Result<PgancOutcome> {
    cfg.validate()?;
    split_by_class(train)?;
    let mut model = PgancModel::new(arch, &mut ChaCha8Rng::seed_from_u64(sub_seed(seed, 20)));
    model.normal = pre.normal;
    model.icing = pre.icing;
    let mut report = pre.report;
    let mut data_flow = pre.data_flow;

    report.extend(train_classifier_frozen(
        &mut model,
        train,
        &cfg.classifier,
        sub_seed(seed, 21),
    )?);
    data_flow.record("stage1.classifier", train.iter().map(|s| s.id));
    let stage1 = model.clone();

    report.extend(train_end_to_end(
        &mut model,
        train,
        &cfg.stage2,
        BnMode::Eval,
        "stage2",
        sub_seed(seed, 22),
    )?);
    data_flow.record("stage2", train.iter().map(|s| s.id));
    Ok(PgancOutcome {
        stage1,
        stage2: model,
        report,
        data_flow,
    })
}

/// Ablation without adversarial pretraining: plain convolutional branches
/// and the same head, trained end-to-end from scratch.
pub fn train_plain_cnn(
    train: &[Sample],
    arch: &ArchConfig,
    cfg: &OptimConfig,
    seed: u64,
) -> Result<(PgancModel, LossReport)> {
    split_by_class(train)?;
    let arch = ArchConfig {
        front: FrontKind::Plain,
        ..*arch
    };
    let mut model = PgancModel::new(&arch, &mut ChaCha8Rng::seed_from_u64(sub_seed(seed, 30)));
    let report = train_end_to_end(
        &mut model,
        train,
        cfg,
        BnMode::Train,
        "plain",
        sub_seed(seed, 31),
    )?;
    Ok((model, report))
}
